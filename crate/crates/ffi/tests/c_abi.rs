use std::ffi::{CStr, CString};
use std::ptr;

use qoc_codesign_ffi::*;

const CONFIG: &str = r#"
seeds = [0]

[quantum.task]
gates = ["X", "I"]
t_steps = 20

[optimizer.e2e]
phases = [10, 20]
phase_episodes = [200, 200]
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(qoc_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn simulator() -> *mut QocSimulator {
    let cfg = CString::new(CONFIG).unwrap();
    let mut sim = ptr::null_mut();
    let st = unsafe { qoc_simulator_from_config(cfg.as_ptr(), 0, &mut sim) };
    assert_eq!(st, QocStatus::Ok, "{}", last_error());
    assert!(!sim.is_null());
    sim
}

#[test]
fn fidelity_and_gradient_round_trip() {
    let sim = simulator();
    unsafe {
        assert_eq!(qoc_simulator_n_channels(sim), 2);
        assert_eq!(qoc_simulator_t_steps(sim), 20);
        let len = qoc_simulator_schedule_len(sim, 4);
        assert_eq!(len, 16);
        let volts: Vec<f64> = (0..len).map(|i| (i as f64 * 1.7) % 15.0 - 7.0).collect();
        let mut f = 0.0;
        assert_eq!(
            qoc_simulator_fidelity(sim, volts.as_ptr(), len, 4, &mut f),
            QocStatus::Ok
        );
        let mut cost = 0.0;
        let mut grad = vec![0.0; len];
        assert_eq!(
            qoc_simulator_cost_grad(sim, volts.as_ptr(), len, 4, &mut cost, grad.as_mut_ptr()),
            QocStatus::Ok
        );
        assert!((cost - (1.0 - f)).abs() < 1e-15);
        assert!(grad.iter().all(|g| g.is_finite()) && grad.iter().any(|g| *g != 0.0));
        qoc_simulator_free(sim);
    }
}

#[test]
fn errors_are_reported() {
    let sim = simulator();
    unsafe {
        let volts = [0.0; 12];
        let mut f = 0.0;
        assert_eq!(
            qoc_simulator_fidelity(sim, volts.as_ptr(), 12, 4, &mut f),
            QocStatus::Dimension
        );
        assert!(last_error().contains("expected 16"), "{}", last_error());
        let mut bad = [0.0; 16];
        bad[3] = 20.0;
        assert_eq!(
            qoc_simulator_fidelity(sim, bad.as_ptr(), 16, 4, &mut f),
            QocStatus::Constraint
        );
        assert_eq!(
            qoc_simulator_fidelity(sim, ptr::null(), 16, 4, &mut f),
            QocStatus::NullPointer
        );
        assert_eq!(
            qoc_simulator_fidelity(ptr::null(), bad.as_ptr(), 16, 4, &mut f),
            QocStatus::NullPointer
        );
        qoc_simulator_free(sim);
        qoc_simulator_free(ptr::null_mut());

        let cfg = CString::new("[quantum.task]\ngates = [\"X\"]\ndetunning = 1\n[optimizer.e2e]\n")
            .unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(
            qoc_simulator_from_config(cfg.as_ptr(), 0, &mut out),
            QocStatus::Config
        );
        assert!(out.is_null());
        assert!(last_error().contains("detunning"));

        let name = CString::new("no_such_preset").unwrap();
        assert_eq!(
            qoc_simulator_from_preset(name.as_ptr(), 0, 0, &mut out),
            QocStatus::Config
        );
        let name = CString::new("pitch_sweep").unwrap();
        assert_eq!(
            qoc_simulator_from_preset(name.as_ptr(), 4, 0, &mut out),
            QocStatus::Ok
        );
        qoc_simulator_free(out);
        assert_eq!(
            qoc_simulator_from_preset(name.as_ptr(), 5, 0, &mut out),
            QocStatus::InvalidArgument
        );
    }
}

#[test]
fn optimize_and_read_report() {
    let cfg = CString::new(CONFIG).unwrap();
    unsafe {
        let mut rep = ptr::null_mut();
        assert_eq!(
            qoc_optimize(cfg.as_ptr(), 0, &mut rep),
            QocStatus::Ok,
            "{}",
            last_error()
        );
        let err = qoc_report_final_error(rep);
        assert!((0.0..=1.0).contains(&err));
        let mut len = 0usize;
        assert_eq!(
            qoc_report_best_schedule(rep, ptr::null_mut(), &mut len),
            QocStatus::BufferTooSmall
        );
        assert_eq!(len, 2 * 2 * qoc_report_n_segments(rep));
        let mut buf = vec![0.0; len];
        assert_eq!(
            qoc_report_best_schedule(rep, buf.as_mut_ptr(), &mut len),
            QocStatus::Ok
        );
        assert!(buf.iter().all(|v| (-15.0..=15.0).contains(v)));

        // The best schedule re-simulated through the C API reproduces the report.
        let sim = simulator();
        let mut f = 0.0;
        let n_seg = qoc_report_n_segments(rep);
        assert_eq!(
            qoc_simulator_fidelity(sim, buf.as_ptr(), len, n_seg, &mut f),
            QocStatus::Ok
        );
        assert!((1.0 - f - err).abs() < 1e-12);
        qoc_simulator_free(sim);

        let json = CStr::from_ptr(qoc_report_json(rep)).to_str().unwrap();
        assert!(json.contains("\"method\":\"e2e\""));
        qoc_report_free(rep);
    }
}

#[test]
fn resolved_config_text() {
    let cfg = CString::new(CONFIG).unwrap();
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(qoc_config_resolve(cfg.as_ptr(), &mut out), QocStatus::Ok);
        let text = CStr::from_ptr(out).to_str().unwrap().to_owned();
        qoc_string_free(out);
        assert!(text.contains("kappa0 = 10.145"));
        assert!(!CStr::from_ptr(qoc_version()).to_bytes().is_empty());
    }
}
